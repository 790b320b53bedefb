//! Compression of encoder features to the diffusion latent and the
//! autoregressive decoder that reads SMILES back out of it.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode_fitting, flatten_ids, EncoderError, MolEncoder};
use crate::numerics::nn::{Linear, TokenTransformer};
use crate::numerics::{
    clip_grad_norm, cosine_lr, AdamW, AttnShape, Binding, Graph, NumericsError, ParamStore, Tensor, Var,
};
use crate::smiles::{self, MolGraph};
use crate::tokenizer::{TokenSequence, TokenizerError, Vocab, EOS, PAD, SOS};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("an encoder is required")]
    MissingEncoder,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub vocab: usize,
    pub len: usize,
    pub d_enc: usize,
    pub d_z: usize,
    /// `false` skips the compression layer: the latent is the raw feature.
    pub compress: bool,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
}

impl CodecConfig {
    pub fn latent_dim(&self) -> usize {
        if self.compress {
            self.d_z
        } else {
            self.d_enc
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    compressor: Option<Linear>,
    dec: TokenTransformer,
    head: Linear,
    /// Global scale dividing raw latents before diffusion.
    pub latent_std: f64,
}

impl LatentCodec {
    pub fn new(cfg: CodecConfig, rng: &mut impl Rng) -> LatentCodec {
        let mut store = ParamStore::new();
        let compressor = cfg.compress.then(|| Linear::new(&mut store, "compress", cfg.d_enc, cfg.d_z, false, rng));
        let dec = TokenTransformer::new(
            &mut store,
            "dec",
            cfg.vocab,
            cfg.len,
            cfg.d_model,
            cfg.layers,
            cfg.heads,
            Some(cfg.latent_dim()),
            rng,
        );
        let head = Linear::new(&mut store, "dec.head", cfg.d_model, cfg.vocab, true, rng);
        LatentCodec { cfg, store, compressor, dec, head, latent_std: 1.0 }
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.cfg.len, self.cfg.latent_dim()]
    }

    pub fn compress_var(&self, g: &mut Graph, p: &mut Binding, features: Var) -> Result<Var, CodecError> {
        match &self.compressor {
            Some(c) => Ok(c.forward(g, p, features)?),
            None => Ok(features),
        }
    }

    /// Per-position bias-free linear map `d_enc -> d_z` (raw, unscaled latent).
    pub fn compress(&self, feature: &Tensor) -> Result<Tensor, CodecError> {
        if feature.shape() != [self.cfg.len, self.cfg.d_enc] {
            return Err(CodecError::ShapeMismatch(format!("feature {:?}", feature.shape())));
        }
        let mut g = Graph::new();
        let mut p = Binding::new(&self.store, false);
        let f = g.constant(feature.clone());
        let z = self.compress_var(&mut g, &mut p, f)?;
        Ok(g.value(z).clone().reshape(&self.latent_shape())?)
    }

    pub fn standardize(&self, raw: &Tensor) -> Tensor {
        scaled(raw, 1.0 / self.latent_std)
    }

    pub fn destandardize(&self, z: &Tensor) -> Tensor {
        scaled(z, self.latent_std)
    }

    /// Decoder hidden states for `batch` prefixes of length `seq`.
    fn hidden(&self, g: &mut Graph, p: &mut Binding, z: Var, ids: &[usize], batch: usize, seq: usize) -> Result<Var, CodecError> {
        let cross = AttnShape { batch, heads: self.cfg.heads, lq: seq, lk: self.cfg.len, causal: false, key_mask: None };
        Ok(self.dec.forward(g, p, ids, batch, seq, true, None, Some((z, cross)))?)
    }

    /// Summed next-token negative log-likelihood over non-pad targets.
    /// `z` is the raw latent batch `[batch*L, latent_dim]`.
    pub fn decoder_loss_var(&self, g: &mut Graph, p: &mut Binding, z: Var, targets: &[TokenSequence]) -> Result<Var, CodecError> {
        let (l, batch) = (self.cfg.len, targets.len());
        if g.value(z).rows() != batch * l || g.value(z).cols() != self.cfg.latent_dim() {
            return Err(CodecError::ShapeMismatch(format!("latent {:?} for {batch} targets", g.shape(z))));
        }
        let (ids, _) = flatten_ids(targets, l)?;
        let seq = l - 1;
        let inputs: Vec<usize> = (0..batch).flat_map(|b| ids[b * l..b * l + seq].iter().copied()).collect();
        let tgt: Vec<Option<usize>> = (0..batch)
            .flat_map(|b| ids[b * l + 1..(b + 1) * l].iter().map(|&t| (t != PAD as usize).then_some(t)))
            .collect();
        let h = self.hidden(g, p, z, &inputs, batch, seq)?;
        let logits = self.head.forward(g, p, h)?;
        Ok(g.cross_entropy(logits, &tgt)?)
    }

    pub fn decoder_loss(&self, z: &Tensor, target: &TokenSequence) -> Result<f64, CodecError> {
        let mut g = Graph::new();
        let mut p = Binding::new(&self.store, false);
        let zv = g.constant(z.clone());
        let l = self.decoder_loss_var(&mut g, &mut p, zv, std::slice::from_ref(target))?;
        Ok(g.value(l).item()?)
    }

    /// Autoregressive decoding of raw latents from `[SOS]` until `[EOS]` or
    /// `L` tokens.
    pub fn generate_ids(&self, zs: &[Tensor], mode: DecodeMode, rng: &mut impl Rng) -> Result<Vec<Vec<u32>>, CodecError> {
        let l = self.cfg.len;
        for z in zs {
            if z.shape() != self.latent_shape() {
                return Err(CodecError::ShapeMismatch(format!("latent {:?}", z.shape())));
            }
        }
        let mut seqs: Vec<Vec<u32>> = vec![vec![SOS]; zs.len()];
        let mut active: Vec<usize> = (0..zs.len()).collect();
        for t in 1..l {
            if active.is_empty() {
                break;
            }
            let mut g = Graph::new();
            let mut p = Binding::new(&self.store, false);
            let zdata: Vec<f64> = active.iter().flat_map(|&i| zs[i].data().iter().copied()).collect();
            let z = g.constant(Tensor::new(&[active.len() * l, self.cfg.latent_dim()], zdata)?);
            let ids: Vec<usize> = active.iter().flat_map(|&i| seqs[i].iter().map(|&x| x as usize)).collect();
            let h = self.hidden(&mut g, &mut p, z, &ids, active.len(), t)?;
            let last: Vec<usize> = (0..active.len()).map(|b| b * t + t - 1).collect();
            let h = g.gather_rows(h, &last)?;
            let logits = self.head.forward(&mut g, &mut p, h)?;
            let lv = g.value(logits);
            for (b, &i) in active.iter().enumerate() {
                let row = lv.row(b);
                let next = match mode {
                    DecodeMode::Greedy => argmax(row),
                    DecodeMode::Sampled => sample_logits(row, rng),
                };
                seqs[i].push(next as u32);
            }
            active.retain(|&i| *seqs[i].last().expect("nonempty") != EOS);
        }
        Ok(seqs)
    }

    pub fn generate_batch(&self, zs: &[Tensor], vocab: &Vocab, mode: DecodeMode, rng: &mut impl Rng) -> Result<Vec<String>, CodecError> {
        self.generate_ids(zs, mode, rng)?
            .iter()
            .map(|ids| Ok(vocab.decode_ids(ids)?))
            .collect()
    }

    pub fn generate(&self, z: &Tensor, vocab: &Vocab, mode: DecodeMode, rng: &mut impl Rng) -> Result<String, CodecError> {
        Ok(self.generate_batch(std::slice::from_ref(z), vocab, mode, rng)?.remove(0))
    }

    /// Sets `latent_std` from raw latents so standardized entries have unit variance.
    pub fn fit_latent_scale(&mut self, raw: &[Tensor]) {
        let n: usize = raw.iter().map(Tensor::len).sum();
        if n == 0 {
            return;
        }
        let mean = raw.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
        let var = raw.iter().flat_map(|t| t.data()).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 0.0 {
            self.latent_std = var.sqrt();
        }
    }

    /// Raw latents of the canonical spellings of `mols`.
    pub fn encode_molecules(&self, enc: &MolEncoder, vocab: &Vocab, mols: &[MolGraph], rng: &mut impl Rng) -> Result<Vec<Tensor>, CodecError> {
        let mut out = Vec::with_capacity(mols.len());
        for chunk in mols.chunks(64) {
            let seqs = chunk
                .iter()
                .map(|m| encode_fitting(vocab, &smiles::canonicalize(m).map_err(EncoderError::from)?, self.cfg.len, rng))
                .collect::<Result<Vec<_>, _>>()?;
            for f in enc.encode_batch(&seqs)? {
                out.push(self.compress(&f)?);
            }
        }
        Ok(out)
    }
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|x| x * s).collect()).expect("same shape")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_logits(row: &[f64], rng: &mut impl Rng) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    WeightedIndex::new(&w).map(|d| d.sample(rng)).unwrap_or_else(|_| argmax(row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Extra random spellings per molecule fed to the encoder; targets stay canonical.
    pub spellings: usize,
    /// Std of Gaussian noise added to latents during training, relative to
    /// the batch RMS of the latents.
    pub noise: f64,
}

/// Trains compressor + decoder on next-token loss. With `train_encoder`
/// false the encoder is only read; otherwise it is optimized jointly on the
/// same loss. Fits `latent_std` at the end. Returns per-step mean token loss.
pub fn train_codec(
    codec: &mut LatentCodec,
    enc: Option<&mut MolEncoder>,
    train_encoder: bool,
    corpus: &[MolGraph],
    vocab: &Vocab,
    cfg: &CodecTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, CodecError> {
    let enc = enc.ok_or(CodecError::MissingEncoder)?;
    if corpus.is_empty() {
        return Err(CodecError::ShapeMismatch("empty corpus".into()));
    }
    let l = codec.cfg.len;
    let mut targets = Vec::with_capacity(corpus.len());
    let mut inputs: Vec<Vec<TokenSequence>> = Vec::with_capacity(corpus.len());
    for m in corpus {
        let canonical = smiles::canonicalize(m).map_err(EncoderError::from)?;
        let t = vocab.encode(&canonical, l)?;
        let mut variants = vec![t.clone()];
        for _ in 0..cfg.spellings {
            variants.push(encode_fitting(vocab, &smiles::randomize_with(m, rng), l, rng)?);
        }
        targets.push(t);
        inputs.push(variants);
    }
    // frozen encoder: features never change, so compute them once
    let cached: Option<Vec<Vec<Tensor>>> = if train_encoder {
        None
    } else {
        Some(inputs.iter().map(|v| enc.encode_batch(v)).collect::<Result<_, _>>()?)
    };
    let mut opt = AdamW::new(&codec.store, cfg.weight_decay);
    let mut enc_opt = train_encoder.then(|| AdamW::new(&enc.store, cfg.weight_decay));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let pick: Vec<usize> = idx.iter().map(|_| rng.gen_range(0..=cfg.spellings)).collect();
        let batch_targets: Vec<TokenSequence> = idx.iter().map(|&i| targets[i].clone()).collect();
        let mut g = Graph::new();
        let mut p = Binding::new(&codec.store, true);
        let mut pe = Binding::new(&enc.store, train_encoder);
        let feats = match &cached {
            Some(c) => {
                let data: Vec<f64> = idx.iter().zip(&pick).flat_map(|(&i, &k)| c[i][k].data().iter().copied()).collect();
                g.constant(Tensor::new(&[idx.len() * l, codec.cfg.d_enc], data)?)
            }
            None => {
                let seqs: Vec<TokenSequence> = idx.iter().zip(&pick).map(|(&i, &k)| inputs[i][k].clone()).collect();
                enc.forward(&mut g, &mut pe, &seqs)?
            }
        };
        let mut z = codec.compress_var(&mut g, &mut p, feats)?;
        if cfg.noise > 0.0 {
            let zd = g.value(z).data();
            let rms = (zd.iter().map(|x| x * x).sum::<f64>() / zd.len() as f64).sqrt();
            let e = Tensor::randn(g.shape(z), cfg.noise * rms, rng);
            let e = g.constant(e);
            z = g.add(z, e)?;
        }
        let total = codec.decoder_loss_var(&mut g, &mut p, z, &batch_targets)?;
        let n_tokens: usize = batch_targets.iter().map(|t| t.content_len() - 1).sum();
        let loss = g.scale(total, 1.0 / n_tokens as f64);
        losses.push(g.value(loss).item()?);
        let mut grads = g.backward(loss)?;
        let mut cg = p.grads(&mut grads);
        let mut eg = pe.grads(&mut grads);
        drop(p);
        drop(pe);
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        if let Some(eopt) = enc_opt.as_mut() {
            let mut all: Vec<Option<Vec<f64>>> = cg.into_iter().chain(eg).collect();
            clip_grad_norm(&mut all, cfg.clip);
            eg = all.split_off(codec.store.len());
            cg = all;
            eopt.step(&mut enc.store, &eg, lr)?;
        } else {
            clip_grad_norm(&mut cg, cfg.clip);
        }
        opt.step(&mut codec.store, &cg, lr)?;
    }
    let raw = codec.encode_molecules(enc, vocab, corpus, rng)?;
    codec.fit_latent_scale(&raw);
    Ok(losses)
}

/// Fraction of `mols` whose greedy reconstruction has the same canonical form.
pub fn reconstruction_rate(
    codec: &LatentCodec,
    enc: &MolEncoder,
    vocab: &Vocab,
    mols: &[MolGraph],
    rng: &mut impl Rng,
) -> Result<f64, CodecError> {
    if mols.is_empty() {
        return Ok(0.0);
    }
    let raw = codec.encode_molecules(enc, vocab, mols, rng)?;
    let mut hits = 0;
    for (chunk, zs) in mols.chunks(64).zip(raw.chunks(64)) {
        let out = codec.generate_batch(zs, vocab, DecodeMode::Greedy, rng)?;
        for (m, s) in chunk.iter().zip(&out) {
            if smiles::canonical_smiles(s).ok() == smiles::canonicalize(m).ok() {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / mols.len() as f64)
}
