use super::{mismatch, Gradients, Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Replaces every tensor from `(name, tensor)` pairs, which must match
    /// this store's names and shapes exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), NumericsError> {
        if entries.len() != self.values.len() {
            return Err(mismatch("load", format!("expected {} tensors, got {}", self.values.len(), entries.len())));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(mismatch(
                    "load",
                    format!("{} {:?} vs {} {:?}", self.names[i], self.values[i].shape(), name, t.shape()),
                ));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Puts a store's parameters on a graph, once each, as tracked leaves when
/// `trainable` or as constants otherwise.
pub struct Binding<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Binding<'a> {
        Binding { store, vars: vec![None; store.len()], trainable }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with the store; `None` for parameters the step never used.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Adam with decoupled weight decay; `weight_decay = 0` is plain Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        let zeros = || store.values.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<(), NumericsError> {
        if grads.len() != store.len() || store.len() != self.m.len() {
            return Err(mismatch("adamw_step", format!("{} grads for {} params", grads.len(), store.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.values[i].data_mut();
            if g.len() != p.len() {
                return Err(mismatch("adamw_step", format!("param {i}: {} vs {}", g.len(), p.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (update + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_min;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
