//! Bidirectional SMILES transformer trained so that different spellings of
//! one molecule project to nearby unit vectors.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::nn::{Linear, TokenTransformer};
use crate::numerics::{clip_grad_norm, cosine_lr, AdamW, Binding, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::smiles::{self, MolGraph, SmilesError};
use crate::tokenizer::{TokenSequence, TokenizerError, Vocab, PAD, SOS};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad token sequence: {0}")]
    BadSequence(String),
    #[error("cannot project a zero feature")]
    DegenerateFeature,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub len: usize,
    pub d_enc: usize,
    pub layers: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub tau: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.tau <= 0.0 || self.heads == 0 || !self.d_enc.is_multiple_of(self.heads) || self.len < 3 {
            return Err(EncoderError::SizeMismatch(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Unit-norm projection of a molecule's `[SOS]` feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeature(pub Vec<f64>);

impl ProjectedFeature {
    pub fn dot(&self, other: &ProjectedFeature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct MolEncoder {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    body: TokenTransformer,
    proj: Linear,
}

pub(crate) fn flatten_ids(seqs: &[TokenSequence], len: usize) -> Result<(Vec<usize>, Vec<bool>), EncoderError> {
    let mut ids = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        if s.ids.len() != len || s.ids.first() != Some(&SOS) {
            return Err(EncoderError::BadSequence(format!("expected [SOS]-framed length {len}, got {:?}", s.ids)));
        }
        ids.extend(s.ids.iter().map(|&t| t as usize));
    }
    let mask = ids.iter().map(|&t| t != PAD as usize).collect();
    Ok((ids, mask))
}

impl MolEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<MolEncoder, EncoderError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let body = TokenTransformer::new(&mut store, "enc", cfg.vocab, cfg.len, cfg.d_enc, cfg.layers, cfg.heads, None, rng);
        let proj = Linear::new(&mut store, "enc.proj", cfg.d_enc, cfg.proj_dim, true, rng);
        Ok(MolEncoder { cfg, store, body, proj })
    }

    /// Features for a batch, `[batch*L, d_enc]`.
    pub fn forward(&self, g: &mut Graph, p: &mut Binding, seqs: &[TokenSequence]) -> Result<Var, EncoderError> {
        if seqs.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let (ids, mask) = flatten_ids(seqs, self.cfg.len)?;
        Ok(self.body.forward(g, p, &ids, seqs.len(), self.cfg.len, false, Some(&mask), None)?)
    }

    /// Projections of the `[SOS]` rows of `features`, `[batch, proj_dim]`.
    pub fn project_var(&self, g: &mut Graph, p: &mut Binding, features: Var, batch: usize) -> Result<Var, EncoderError> {
        let rows: Vec<usize> = (0..batch).map(|b| b * self.cfg.len).collect();
        let sos = g.gather_rows(features, &rows)?;
        let h = self.proj.forward(g, p, sos)?;
        g.l2_normalize_rows(h).map_err(|e| match e {
            NumericsError::DegenerateFeature(_) => EncoderError::DegenerateFeature,
            e => e.into(),
        })
    }

    /// `L x d_enc` feature of one sequence.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor, EncoderError> {
        Ok(self.encode_batch(std::slice::from_ref(seq))?.remove(0))
    }

    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<Tensor>, EncoderError> {
        let mut g = Graph::new();
        let mut p = Binding::new(&self.store, false);
        let f = self.forward(&mut g, &mut p, seqs)?;
        let (l, d) = (self.cfg.len, self.cfg.d_enc);
        let data = g.value(f).data();
        Ok((0..seqs.len())
            .map(|b| Tensor::new(&[l, d], data[b * l * d..(b + 1) * l * d].to_vec()).expect("slice matches shape"))
            .collect())
    }

    /// Linear map of the `[SOS]` row of a feature, then L2 normalization.
    pub fn project(&self, feature: &Tensor) -> Result<ProjectedFeature, EncoderError> {
        if feature.shape() != [self.cfg.len, self.cfg.d_enc] {
            return Err(EncoderError::SizeMismatch(format!("feature shape {:?}", feature.shape())));
        }
        let mut g = Graph::new();
        let mut p = Binding::new(&self.store, false);
        let f = g.constant(feature.clone());
        let v = self.project_var(&mut g, &mut p, f, 1)?;
        Ok(ProjectedFeature(g.value(v).data().to_vec()))
    }
}

#[derive(Debug, Clone)]
struct QueueEntry {
    molecule: usize,
    v: Vec<f64>,
}

/// Fixed-capacity ring buffer of past projections used as extra negatives.
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    entries: Vec<QueueEntry>,
    cursor: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> MemoryQueue {
        MemoryQueue { capacity, entries: Vec::with_capacity(capacity), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, molecule: usize, v: ProjectedFeature) {
        if self.capacity == 0 {
            return;
        }
        let e = QueueEntry { molecule, v: v.0 };
        if self.entries.len() < self.capacity {
            self.entries.push(e);
        } else {
            self.entries[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn molecules(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.molecule)
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|e| e.v.as_slice())
    }

    fn tensor(&self, dim: usize) -> Tensor {
        let data = self.entries.iter().flat_map(|e| e.v.iter().copied()).collect();
        Tensor::new(&[self.entries.len(), dim], data).expect("queue entries share one width")
    }
}

/// InfoNCE with summed per-anchor terms. Candidates for anchor k are all
/// `positives` (target k), then `hard` negatives, then queue entries; queue
/// entries recorded for the anchor's own molecule are skipped when
/// `anchor_ids` is given.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_var(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    hard: Option<Var>,
    queue: &MemoryQueue,
    anchor_ids: Option<&[usize]>,
    tau: f64,
) -> Result<Var, EncoderError> {
    let (n, dim) = (g.value(anchors).rows(), g.value(anchors).cols());
    if n == 0 {
        return Err(EncoderError::EmptyBatch);
    }
    if g.value(positives).rows() != n || g.value(positives).cols() != dim || anchor_ids.is_some_and(|ids| ids.len() != n) {
        return Err(EncoderError::SizeMismatch(format!("{:?} vs {:?}", g.shape(anchors), g.shape(positives))));
    }
    let cand = match hard {
        Some(h) => g.concat_rows(&[positives, h])?,
        None => positives,
    };
    let mut logits = g.matmul_t(anchors, false, cand, true)?;
    if !queue.is_empty() {
        let q = g.constant(queue.tensor(dim));
        let mut ql = g.matmul_t(anchors, false, q, true)?;
        if let Some(ids) = anchor_ids {
            let mask: Vec<f64> = ids
                .iter()
                .flat_map(|&a| queue.molecules().map(move |m| if m == a { -1e9 } else { 0.0 }))
                .collect();
            let mask = g.constant(Tensor::new(&[n, queue.len()], mask)?);
            ql = g.add(ql, mask)?;
        }
        logits = g.concat_cols(&[logits, ql])?;
    }
    let logits = g.scale(logits, 1.0 / tau);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

fn features_tensor(v: &[ProjectedFeature]) -> Result<Tensor, EncoderError> {
    let dim = v.first().map_or(0, |f| f.0.len());
    if v.iter().any(|f| f.0.len() != dim) {
        return Err(EncoderError::SizeMismatch("ragged projections".into()));
    }
    Ok(Tensor::new(&[v.len(), dim], v.iter().flat_map(|f| f.0.iter().copied()).collect())?)
}

/// `-sum_k log softmax_k(v_k . v'_* / tau)` with queue entries as extra negatives.
pub fn contrastive_loss(
    v: &[ProjectedFeature],
    v_prime: &[ProjectedFeature],
    queue: &MemoryQueue,
    tau: f64,
) -> Result<f64, EncoderError> {
    if v.len() != v_prime.len() {
        return Err(EncoderError::SizeMismatch(format!("{} vs {}", v.len(), v_prime.len())));
    }
    let mut g = Graph::new();
    let a = g.constant(features_tensor(v)?);
    let b = g.constant(features_tensor(v_prime)?);
    let l = contrastive_loss_var(&mut g, a, b, None, queue, None, tau)?;
    Ok(g.value(l).item()?)
}

/// Sum of both directions.
pub fn symmetric_loss(
    m: &[ProjectedFeature],
    m_prime: &[ProjectedFeature],
    queue: &MemoryQueue,
    tau: f64,
) -> Result<f64, EncoderError> {
    Ok(contrastive_loss(m, m_prime, queue, tau)? + contrastive_loss(m_prime, m, queue, tau)?)
}

/// Two independent spellings per molecule, plus stereo-flipped variants
/// that serve only as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub m: Vec<String>,
    pub m_prime: Vec<String>,
    /// `(index of source molecule, spelling of a flipped variant)`.
    pub hard_negatives: Vec<(usize, String)>,
}

pub fn build_batch(molecules: &[MolGraph], rng: &mut impl Rng) -> Result<ContrastiveBatch, EncoderError> {
    if molecules.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let mut batch = ContrastiveBatch { m: vec![], m_prime: vec![], hard_negatives: vec![] };
    for (i, g) in molecules.iter().enumerate() {
        g.validate()?;
        batch.m.push(smiles::randomize_with(g, rng));
        batch.m_prime.push(smiles::randomize_with(g, rng));
        for flipped in smiles::flip_stereocenters(g) {
            batch.hard_negatives.push((i, smiles::randomize_with(&flipped, rng)));
        }
    }
    Ok(batch)
}

/// Encodes `s`, retrying other random spellings of the same molecule when it
/// doesn't fit, and finally the canonical spelling.
pub fn encode_fitting(vocab: &Vocab, s: &str, len: usize, rng: &mut impl Rng) -> Result<TokenSequence, EncoderError> {
    if let Ok(t) = vocab.encode(s, len) {
        return Ok(t);
    }
    let g = smiles::parse_valid(s)?;
    for _ in 0..8 {
        if let Ok(t) = vocab.encode(&smiles::randomize_with(&g, rng), len) {
            return Ok(t);
        }
    }
    Ok(vocab.encode(&smiles::canonicalize(&g)?, len)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub queue: usize,
    pub clip: f64,
}

/// Contrastive pretraining over `corpus`; returns the per-step loss
/// (symmetric loss divided by the anchor count).
pub fn pretrain(
    enc: &mut MolEncoder,
    corpus: &[MolGraph],
    vocab: &Vocab,
    cfg: &EncoderTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, EncoderError> {
    if corpus.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let mut opt = AdamW::new(&enc.store, cfg.weight_decay);
    let mut queue = MemoryQueue::new(cfg.queue);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut ids = Vec::with_capacity(cfg.batch);
        while ids.len() < cfg.batch.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            ids.push(order[cursor]);
            cursor += 1;
        }
        let mols: Vec<MolGraph> = ids.iter().map(|&i| corpus[i].clone()).collect();
        let batch = build_batch(&mols, rng)?;
        let n = batch.m.len();
        let mut seqs = Vec::with_capacity(2 * n + batch.hard_negatives.len());
        for s in batch.m.iter().chain(&batch.m_prime).chain(batch.hard_negatives.iter().map(|(_, s)| s)) {
            seqs.push(encode_fitting(vocab, s, enc.cfg.len, rng)?);
        }
        let mut g = Graph::new();
        let mut p = Binding::new(&enc.store, true);
        let feats = enc.forward(&mut g, &mut p, &seqs)?;
        let v = enc.project_var(&mut g, &mut p, feats, seqs.len())?;
        let m = g.slice_rows(v, 0, n)?;
        let mp = g.slice_rows(v, n, n)?;
        let hard = (seqs.len() > 2 * n).then(|| g.slice_rows(v, 2 * n, seqs.len() - 2 * n)).transpose()?;
        let l1 = contrastive_loss_var(&mut g, m, mp, hard, &queue, Some(&ids), enc.cfg.tau)?;
        let l2 = contrastive_loss_var(&mut g, mp, m, hard, &queue, Some(&ids), enc.cfg.tau)?;
        let total = g.add(l1, l2)?;
        let loss = g.scale(total, 1.0 / n as f64);
        losses.push(g.value(loss).item()?);
        let mut grads = g.backward(loss)?;
        let mut grads = p.grads(&mut grads);
        clip_grad_norm(&mut grads, cfg.clip);
        let new_queue: Vec<ProjectedFeature> =
            (0..n).map(|k| ProjectedFeature(g.value(mp).row(k).to_vec())).collect();
        drop(p);
        opt.step(&mut enc.store, &grads, cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min))?;
        for (k, v) in new_queue.into_iter().enumerate() {
            queue.push(ids[k], v);
        }
    }
    Ok(losses)
}
