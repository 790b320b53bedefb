//! Transformer building blocks over [`ParamStore`] parameters.

use rand::Rng;

use super::{AttnShape, Binding, Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

type Res<T> = Result<T, NumericsError>;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Weights drawn from N(0, 1/din), zero bias.
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Linear {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[din, dout], (1.0 / din as f64).sqrt(), rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[dout])));
        Linear { w, b, din, dout }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Linear {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[dout])));
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding, x: Var) -> Res<Var> {
        let w = p.var(g, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = p.var(g, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Norm {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Norm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding, x: Var) -> Res<Var> {
        let n = g.layer_norm(x);
        let (gamma, beta) = (p.var(g, self.gamma), p.var(g, self.beta));
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
}

impl MultiHead {
    /// `dkv` is the width of the attended context.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, dkv: usize, heads: usize, rng: &mut impl Rng) -> MultiHead {
        MultiHead {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dkv, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dkv, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding, x: Var, ctx: Var, shape: AttnShape) -> Res<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, ctx)?;
        let v = self.v.forward(g, p, ctx)?;
        let a = g.attention(q, k, v, AttnShape { heads: self.heads, ..shape })?;
        self.o.forward(g, p, a)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Mlp {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding, x: Var) -> Res<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: Norm,
    attn: MultiHead,
    cross: Option<(Norm, MultiHead)>,
    ln2: Norm,
    mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        cross_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Block {
        Block {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHead::new(store, &format!("{name}.attn"), d, d, heads, rng),
            cross: cross_dim.map(|dc| {
                (
                    Norm::new(store, &format!("{name}.lnx"), d),
                    MultiHead::new(store, &format!("{name}.xattn"), d, dc, heads, rng),
                )
            }),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binding,
        x: Var,
        self_shape: AttnShape,
        cross: Option<(Var, AttnShape)>,
    ) -> Res<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, h, self_shape)?;
        let mut x = g.add(x, h)?;
        if let (Some((ln, attn)), Some((ctx, shape))) = (&self.cross, cross) {
            let h = ln.forward(g, p, x)?;
            let h = attn.forward(g, p, h, ctx, shape)?;
            x = g.add(x, h)?;
        }
        let h = self.ln2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Token + learned position embedding followed by a block stack and a final norm.
#[derive(Debug, Clone)]
pub struct TokenTransformer {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    pub d: usize,
    pub len: usize,
    pub heads: usize,
}

impl TokenTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        len: usize,
        d: usize,
        layers: usize,
        heads: usize,
        cross_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> TokenTransformer {
        let tok = store.add(format!("{name}.tok"), Tensor::randn(&[vocab, d], 0.1, rng));
        let pos = store.add(format!("{name}.pos"), Tensor::randn(&[len, d], 0.1, rng));
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), d, heads, cross_dim, rng))
            .collect();
        let norm = Norm::new(store, &format!("{name}.norm"), d);
        TokenTransformer { tok, pos, blocks, norm, d, len, heads }
    }

    /// `ids` holds `batch` rows of `seq <= len` ids. Returns `[batch*seq, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binding,
        ids: &[usize],
        batch: usize,
        seq: usize,
        causal: bool,
        key_mask: Option<&[bool]>,
        cross: Option<(Var, AttnShape)>,
    ) -> Res<Var> {
        if seq > self.len || ids.len() != batch * seq {
            return Err(super::mismatch("token_transformer", format!("{} ids for {batch}x{seq}", ids.len())));
        }
        let tok = p.var(g, self.tok);
        let x = g.embedding(tok, ids)?;
        let pos_table = p.var(g, self.pos);
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.embedding(pos_table, &pos_ids)?;
        let mut x = g.add(x, pos)?;
        let shape = AttnShape { batch, heads: self.heads, lq: seq, lk: seq, causal, key_mask };
        for b in &self.blocks {
            x = b.forward(g, p, x, shape, cross)?;
        }
        self.norm.forward(g, p, x)
    }
}

/// `[n, dim]` sinusoidal features of the scalars in `ts`.
pub fn sinusoidal(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; ts.len() * dim];
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data[r * dim + i] = (t * f).sin();
            data[r * dim + half + i] = (t * f).cos();
        }
    }
    Tensor { shape: vec![ts.len(), dim], data }
}
