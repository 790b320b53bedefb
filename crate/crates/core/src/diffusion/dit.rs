//! One-dimensional diffusion transformer with adaptive layer-norm timestep
//! modulation and cross-attention to a jointly trained caption encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{q_sample, standard_normal, DiffusionError, NoiseSchedule};
use crate::numerics::nn::{sinusoidal, Linear, Mlp, MultiHead, Norm, TokenTransformer};
use crate::numerics::{
    clip_grad_norm, cosine_lr, AdamW, AttnShape, Binding, Graph, NumericsError, ParamId, ParamStore, Tensor, Var,
};
use crate::tokenizer::{TokenSequence, PAD};

type Res<T> = Result<T, DiffusionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub latent_len: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub caption_vocab: usize,
    pub caption_len: usize,
    pub caption_layers: usize,
    /// Rows of the learned null-condition sequence.
    pub null_len: usize,
}

/// Encoded condition rows `[n, width]` with a key mask; `null` marks the
/// learned unconditional sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub rows: Tensor,
    pub mask: Vec<bool>,
    pub null: bool,
}

#[derive(Debug, Clone)]
struct DitBlock {
    ada: Linear,
    attn: MultiHead,
    lnx: Norm,
    xattn: MultiHead,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub cfg: DitConfig,
    /// Denoiser parameters, including the null condition.
    pub dit: ParamStore,
    pub captions: ParamStore,
    input: Linear,
    pos: ParamId,
    t1: Linear,
    t2: Linear,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    out: Linear,
    null: ParamId,
    cap: TokenTransformer,
}

/// `ln(x) * (1 + scale) + shift`
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var, NumericsError> {
    let n = g.layer_norm(x);
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul(n, s)?;
    g.add(y, shift)
}

impl DiffusionModel {
    pub fn new(cfg: DitConfig, rng: &mut impl Rng) -> Res<DiffusionModel> {
        let w = cfg.width;
        if w == 0 || cfg.heads == 0 || !w.is_multiple_of(cfg.heads) || !w.is_multiple_of(2) || cfg.null_len == 0 || cfg.null_len > cfg.caption_len || cfg.latent_len == 0 {
            return Err(DiffusionError::ShapeMismatch(format!("invalid DiT config {cfg:?}")));
        }
        let mut dit = ParamStore::new();
        let input = Linear::new(&mut dit, "dit.in", cfg.latent_dim, w, true, rng);
        let pos = dit.add("dit.pos", Tensor::randn(&[cfg.latent_len, w], 0.02, rng));
        let t1 = Linear::new(&mut dit, "dit.t1", w, w, true, rng);
        let t2 = Linear::new(&mut dit, "dit.t2", w, w, true, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("dit.block{i}");
                DitBlock {
                    ada: Linear::zeroed(&mut dit, &format!("{name}.ada"), w, 6 * w),
                    attn: MultiHead::new(&mut dit, &format!("{name}.attn"), w, w, cfg.heads, rng),
                    lnx: Norm::new(&mut dit, &format!("{name}.lnx"), w),
                    xattn: MultiHead::new(&mut dit, &format!("{name}.xattn"), w, w, cfg.heads, rng),
                    mlp: Mlp::new(&mut dit, &format!("{name}.mlp"), w, 4 * w, rng),
                }
            })
            .collect();
        let final_ada = Linear::zeroed(&mut dit, "dit.final_ada", w, 2 * w);
        let out = Linear::zeroed(&mut dit, "dit.out", w, cfg.latent_dim);
        let null = dit.add("dit.null", Tensor::randn(&[cfg.null_len, w], 0.1, rng));
        let mut captions = ParamStore::new();
        let cap = TokenTransformer::new(
            &mut captions,
            "cap",
            cfg.caption_vocab,
            cfg.caption_len,
            w,
            cfg.caption_layers,
            cfg.heads,
            None,
            rng,
        );
        Ok(DiffusionModel { cfg, dit, captions, input, pos, t1, t2, blocks, final_ada, out, null, cap })
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.cfg.latent_len, self.cfg.latent_dim]
    }

    /// Noise prediction for `ts.len()` latents stacked as `[B*L, latent_dim]`.
    /// `ctx` is `[B*lc, width]` with `mask` over its rows.
    #[allow(clippy::too_many_arguments)]
    pub fn eps_var(&self, g: &mut Graph, p: &mut Binding, z: Var, ts: &[usize], ctx: Var, mask: &[bool], lc: usize) -> Res<Var> {
        let (b, l, w) = (ts.len(), self.cfg.latent_len, self.cfg.width);
        if g.shape(z) != [b * l, self.cfg.latent_dim] || g.shape(ctx) != [b * lc, w] || mask.len() != b * lc {
            return Err(DiffusionError::ShapeMismatch(format!(
                "latent {:?}, context {:?} for batch {b}",
                g.shape(z),
                g.shape(ctx)
            )));
        }
        let x = self.input.forward(g, p, z)?;
        let pos = p.var(g, self.pos);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding(pos, &pos_ids)?;
        let mut x = g.add(x, pos)?;

        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = g.constant(sinusoidal(&tf, w));
        let c = self.t1.forward(g, p, temb)?;
        let c = g.silu(c);
        let c = self.t2.forward(g, p, c)?;
        let c = g.silu(c);

        let self_shape = AttnShape { batch: b, heads: self.cfg.heads, lq: l, lk: l, causal: false, key_mask: None };
        let cross_shape = AttnShape { batch: b, heads: self.cfg.heads, lq: l, lk: lc, causal: false, key_mask: Some(mask) };
        for blk in &self.blocks {
            let m = blk.ada.forward(g, p, c)?;
            let m = g.repeat_rows(m, l);
            let mut parts = Vec::with_capacity(6);
            for k in 0..6 {
                parts.push(g.slice_cols(m, k * w, w)?);
            }
            let h = modulate(g, x, parts[0], parts[1])?;
            let h = blk.attn.forward(g, p, h, h, self_shape)?;
            let h = g.mul(h, parts[2])?;
            x = g.add(x, h)?;
            let h = blk.lnx.forward(g, p, x)?;
            let h = blk.xattn.forward(g, p, h, ctx, cross_shape)?;
            x = g.add(x, h)?;
            let h = modulate(g, x, parts[3], parts[4])?;
            let h = blk.mlp.forward(g, p, h)?;
            let h = g.mul(h, parts[5])?;
            x = g.add(x, h)?;
        }
        let m = self.final_ada.forward(g, p, c)?;
        let m = g.repeat_rows(m, l);
        let shift = g.slice_cols(m, 0, w)?;
        let scale = g.slice_cols(m, w, w)?;
        let h = modulate(g, x, shift, scale)?;
        Ok(self.out.forward(g, p, h)?)
    }

    /// Caption rows for a training batch; `None` entries take the null sequence.
    pub fn context_var(
        &self,
        g: &mut Graph,
        p: &mut Binding,
        pc: &mut Binding,
        caps: &[Option<&TokenSequence>],
    ) -> Res<(Var, Vec<bool>, usize)> {
        let (w, nl) = (self.cfg.width, self.cfg.null_len);
        let real: Vec<TokenSequence> = caps.iter().flatten().map(|&s| s.clone()).collect();
        for s in &real {
            if s.content_len() > self.cfg.caption_len {
                return Err(DiffusionError::TooLong { len: s.content_len(), max: self.cfg.caption_len });
            }
        }
        let lc = real.iter().map(TokenSequence::content_len).max().unwrap_or(0).max(nl);
        let null = p.var(g, self.null);
        let null = if lc > nl {
            let pad = g.constant(Tensor::zeros(&[lc - nl, w]));
            g.concat_rows(&[null, pad])?
        } else {
            null
        };
        let mut null_mask = vec![true; nl];
        null_mask.resize(lc, false);
        let (table, real_mask) = if real.is_empty() {
            (null, Vec::new())
        } else {
            let (ids, m) = prefix_ids(&real, lc);
            let enc = self.cap.forward(g, pc, &ids, real.len(), lc, false, Some(&m), None)?;
            (g.concat_rows(&[enc, null])?, m)
        };
        let null_base = real.len() * lc;
        let mut idx = Vec::with_capacity(caps.len() * lc);
        let mut mask = Vec::with_capacity(caps.len() * lc);
        let mut r = 0;
        for c in caps {
            if c.is_some() {
                idx.extend(r * lc..(r + 1) * lc);
                mask.extend_from_slice(&real_mask[r * lc..(r + 1) * lc]);
                r += 1;
            } else {
                idx.extend(null_base..null_base + lc);
                mask.extend_from_slice(&null_mask);
            }
        }
        Ok((g.gather_rows(table, &idx)?, mask, lc))
    }

    /// Pads fixed embeddings to a common row count.
    fn context_const(&self, g: &mut Graph, conds: &[&CaptionEmbedding]) -> (Var, Vec<bool>, usize) {
        let w = self.cfg.width;
        let lc = conds.iter().map(|c| c.mask.len()).max().unwrap_or(1).max(1);
        let mut data = Vec::with_capacity(conds.len() * lc * w);
        let mut mask = Vec::with_capacity(conds.len() * lc);
        for c in conds {
            data.extend_from_slice(c.rows.data());
            data.resize(data.len() + (lc - c.mask.len()) * w, 0.0);
            mask.extend_from_slice(&c.mask);
            mask.resize(mask.len() + lc - c.mask.len(), false);
        }
        let v = g.constant(Tensor::new(&[conds.len() * lc, w], data).expect("sized"));
        (v, mask, lc)
    }

    pub fn encode_caption(&self, caption: &TokenSequence) -> Res<CaptionEmbedding> {
        let n = caption.content_len();
        if n > self.cfg.caption_len {
            return Err(DiffusionError::TooLong { len: n, max: self.cfg.caption_len });
        }
        let (ids, _) = prefix_ids(std::slice::from_ref(caption), n);
        let mut g = Graph::new();
        let mut pc = Binding::new(&self.captions, false);
        let out = self.cap.forward(&mut g, &mut pc, &ids, 1, n, false, None, None)?;
        Ok(CaptionEmbedding { rows: g.value(out).clone(), mask: vec![true; n], null: false })
    }

    pub fn null_embedding(&self) -> CaptionEmbedding {
        CaptionEmbedding { rows: self.dit.get(self.null).clone(), mask: vec![true; self.cfg.null_len], null: true }
    }

    /// Batched inference; inputs are matched by position.
    pub fn predict_eps(&self, zs: &[Tensor], ts: &[usize], conds: &[&CaptionEmbedding]) -> Res<Vec<Tensor>> {
        if zs.len() != ts.len() || zs.len() != conds.len() {
            return Err(DiffusionError::ShapeMismatch(format!("{} latents, {} steps, {} conditions", zs.len(), ts.len(), conds.len())));
        }
        let shape = self.latent_shape();
        let mut out = Vec::with_capacity(zs.len());
        for start in (0..zs.len()).step_by(128) {
            let end = (start + 128).min(zs.len());
            let mut g = Graph::new();
            let mut p = Binding::new(&self.dit, false);
            let mut data = Vec::with_capacity((end - start) * shape[0] * shape[1]);
            for z in &zs[start..end] {
                if z.shape() != shape {
                    return Err(DiffusionError::ShapeMismatch(format!("latent {:?}", z.shape())));
                }
                data.extend_from_slice(z.data());
            }
            let z = g.constant(Tensor::new(&[(end - start) * shape[0], shape[1]], data)?);
            let (ctx, mask, lc) = self.context_const(&mut g, &conds[start..end]);
            let e = self.eps_var(&mut g, &mut p, z, &ts[start..end], ctx, &mask, lc)?;
            let v = g.value(e);
            for b in 0..end - start {
                let rows = v.data()[b * shape[0] * shape[1]..(b + 1) * shape[0] * shape[1]].to_vec();
                out.push(Tensor::new(&shape, rows)?);
            }
        }
        Ok(out)
    }

    /// Batch noise-prediction loss `mean_b ||eps_hat - eps||^2` for given
    /// noised latents, timesteps, targets and captions.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_var(
        &self,
        g: &mut Graph,
        p: &mut Binding,
        pc: &mut Binding,
        z_t: &[Tensor],
        ts: &[usize],
        eps: &[Tensor],
        caps: &[Option<&TokenSequence>],
    ) -> Res<Var> {
        if z_t.is_empty() {
            return Err(DiffusionError::EmptyBatch);
        }
        let [l, d] = self.latent_shape();
        let stack = |ts: &[Tensor]| -> Res<Tensor> {
            let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::new(&[ts.len() * l, d], data)?)
        };
        let z = g.constant(stack(z_t)?);
        let target = g.constant(stack(eps)?);
        let (ctx, mask, lc) = self.context_var(g, p, pc, caps)?;
        let pred = self.eps_var(g, p, z, ts, ctx, &mask, lc)?;
        let mse = g.mse(pred, target)?;
        Ok(g.scale(mse, (l * d) as f64))
    }
}

/// First `len` ids of each sequence (zero-padded) with a non-pad mask.
fn prefix_ids(seqs: &[TokenSequence], len: usize) -> (Vec<usize>, Vec<bool>) {
    let ids: Vec<usize> = seqs
        .iter()
        .flat_map(|s| (0..len).map(move |i| s.ids.get(i).map_or(PAD as usize, |&t| t as usize)))
        .collect();
    let mask = ids.iter().map(|&t| t != PAD as usize).collect();
    (ids, mask)
}

/// Independent Bernoulli(`p`) draws marking items whose caption becomes null.
pub fn draw_null_mask(n: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

/// One diffusion training example: a standardized latent and its caption.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub latent: Tensor,
    pub caption: Option<TokenSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Labeled items whose caption was dropped this step.
    pub dropped: usize,
    pub labeled: usize,
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainer {
    opt: AdamW,
    cap_opt: Option<AdamW>,
    pub total_steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub clip: f64,
    pub p_null: f64,
    step: usize,
}

impl DiffusionTrainer {
    /// `freeze_captions` keeps the caption encoder fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &DiffusionModel,
        total_steps: usize,
        lr: f64,
        lr_min: f64,
        weight_decay: f64,
        clip: f64,
        p_null: f64,
        freeze_captions: bool,
    ) -> DiffusionTrainer {
        DiffusionTrainer {
            opt: AdamW::new(&model.dit, weight_decay),
            cap_opt: (!freeze_captions).then(|| AdamW::new(&model.captions, weight_decay)),
            total_steps,
            lr,
            lr_min,
            clip,
            p_null,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn train_step(
        &mut self,
        model: &mut DiffusionModel,
        sched: &NoiseSchedule,
        batch: &[TrainItem],
        rng: &mut impl Rng,
    ) -> Res<StepStats> {
        if batch.is_empty() {
            return Err(DiffusionError::EmptyBatch);
        }
        let drop = draw_null_mask(batch.len(), self.p_null, rng);
        let caps: Vec<Option<&TokenSequence>> =
            batch.iter().zip(&drop).map(|(it, &d)| if d { None } else { it.caption.as_ref() }).collect();
        let labeled = batch.iter().filter(|it| it.caption.is_some()).count();
        let dropped = batch.iter().zip(&drop).filter(|(it, &d)| d && it.caption.is_some()).count();
        let mut ts = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        let mut z_t = Vec::with_capacity(batch.len());
        for it in batch {
            let t = rng.gen_range(1..=sched.steps());
            let e = standard_normal(it.latent.shape(), rng);
            z_t.push(q_sample(&it.latent, t, &e, sched)?);
            ts.push(t);
            eps.push(e);
        }
        let mut g = Graph::new();
        let mut p = Binding::new(&model.dit, true);
        let mut pc = Binding::new(&model.captions, self.cap_opt.is_some());
        let loss = model.loss_var(&mut g, &mut p, &mut pc, &z_t, &ts, &eps, &caps)?;
        let value = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        let gd = p.grads(&mut grads);
        let gc = pc.grads(&mut grads);
        let n_dit = gd.len();
        let mut all: Vec<Option<Vec<f64>>> = gd.into_iter().chain(gc).collect();
        clip_grad_norm(&mut all, self.clip);
        let gc = all.split_off(n_dit);
        let lr = cosine_lr(self.step, self.total_steps, self.lr, self.lr_min);
        self.opt.step(&mut model.dit, &all, lr)?;
        if let Some(opt) = self.cap_opt.as_mut() {
            opt.step(&mut model.captions, &gc, lr)?;
        }
        self.step += 1;
        Ok(StepStats { loss: value, dropped, labeled })
    }
}
