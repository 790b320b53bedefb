use super::{gemm, gemm_view, mismatch, NumericsError, Tensor, View};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LN_EPS: f64 = 1e-10;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RepeatRows(Var, usize),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    /// Keeps the derivative of the activation at each input.
    Gelu { a: Var, dydx: Vec<f64> },
    Silu { a: Var, dydx: Vec<f64> },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    L2Normalize { a: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Attention(Box<AttnRecord>),
}

struct AttnRecord {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    scale: f64,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Options for [`Graph::attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttnShape<'m> {
    pub batch: usize,
    pub heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub causal: bool,
    /// `batch * lk` flags; `false` keys are never attended to.
    pub key_mask: Option<&'m [bool]>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only tape. Leaves are either parameters (tracked) or constants.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Hands a mutable gradient slot for a variable to the given closure.
type Accumulate<'a> = dyn FnMut(Var, &mut dyn FnMut(&mut [f64])) + 'a;

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// op(a) * op(b) where op transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, 0.0);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, false)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    fn row_op(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        let c = self.dims(a).1;
        if self.value(row).len() != c {
            return Err(mismatch(op, format!("{:?} with row {:?}", self.shape(a), self.shape(row))));
        }
        let r = self.value(row).data();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        for x in src.chunks(c.max(1)) {
            data.extend(x.iter().zip(r).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(self.shape(a), data)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let t = self.row_op("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let t = self.row_op("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, row), &[a, row]))
    }

    /// `[r, c] -> [r * times, c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor { shape: vec![r * times, c], data };
        self.push(t, Op::RepeatRows(a, times), &[a])
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let x = &src[i * c..(i + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                data[i * c + j] = (x[j] - mean) * s;
            }
        }
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(t, Op::LayerNorm { a, inv_std }, &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(x.len());
        let mut dydx = Vec::with_capacity(x.len());
        for &x in x {
            let th = tanh(GELU_C * (x + 0.044715 * x * x * x));
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            out.push(0.5 * x * (1.0 + th));
            dydx.push(0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
        }
        let t = Tensor { shape: self.shape(a).to_vec(), data: out };
        self.push(t, Op::Gelu { a, dydx }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(x.len());
        let mut dydx = Vec::with_capacity(x.len());
        for &x in x {
            let s = 1.0 / (1.0 + (-x).exp());
            out.push(x * s);
            dydx.push(s * (1.0 + x * (1.0 - s)));
        }
        let t = Tensor { shape: self.shape(a).to_vec(), data: out };
        self.push(t, Op::Silu { a, dydx }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let c = self.dims(a).1;
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = self.dims(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::OutOfRange { op: "embedding", index: id, extent: v });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor { shape: vec![ids.len(), d], data };
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Sum over rows with a target of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(mismatch("cross_entropy", format!("{r} rows, {} targets", targets.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, tgt) in targets.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            let Some(t) = *tgt else { continue };
            if t >= c {
                return Err(NumericsError::OutOfRange { op: "cross_entropy", index: t, extent: c });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(mismatch("concat_rows", format!("{:?} vs {c} columns", self.shape(p))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor { shape: vec![data.len() / c.max(1), c], data };
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor { shape: vec![r, total], data };
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(NumericsError::OutOfRange { op: "slice_rows", index: start + len, extent: r });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor { shape: vec![len, c], data };
        Ok(self.push(t, Op::SliceRows { a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(NumericsError::OutOfRange { op: "slice_cols", index: start + len, extent: c });
        }
        let src = self.value(a).data();
        let data = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        let t = Tensor { shape: vec![r, len], data };
        Ok(self.push(t, Op::SliceCols { a, start }, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericsError::OutOfRange { op: "gather_rows", index: i, extent: r });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor { shape: vec![idx.len(), c], data };
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        let mut t = self.value(a).clone();
        let mut norms = vec![0.0; r];
        for (i, row) in t.data_mut().chunks_mut(c.max(1)).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericsError::DegenerateFeature(i));
            }
            norms[i] = n;
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(self.push(t, Op::L2Normalize { a, norms }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Multi-head scaled dot-product attention. `q` is `[batch*lq, d]`, `k`
    /// and `v` are `[batch*lk, d]`; heads split the columns evenly. Rows whose
    /// keys are all masked produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, s: AttnShape) -> Result<Var, NumericsError> {
        let AttnShape { batch, heads, lq, lk, causal, key_mask } = s;
        let d = self.dims(q).1;
        if self.dims(q) != (batch * lq, d)
            || self.dims(k) != (batch * lk, d)
            || self.dims(v) != (batch * lk, d)
            || heads == 0
            || !d.is_multiple_of(heads)
            || key_mask.is_some_and(|m| m.len() != batch * lk)
        {
            return Err(mismatch(
                "attention",
                format!("q {:?} k {:?} v {:?} batch {batch} heads {heads}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = vec![0.0; batch * lq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                let qv = View { data: qd, offset: b * lq * d + h * dh, rs: d, cs: 1 };
                let kt = View { data: kd, offset: b * lk * d + h * dh, rs: 1, cs: d };
                gemm_view(lq, dh, lk, scale, qv, kt, 0.0, p, 0, lk);
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    for (j, x) in row.iter_mut().enumerate() {
                        let masked = (causal && j > i) || key_mask.is_some_and(|m| !m[b * lk + j]);
                        if masked {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                let pv = View { data: p, offset: 0, rs: lk, cs: 1 };
                let vv = View { data: vd, offset: b * lk * d + h * dh, rs: d, cs: 1 };
                gemm_view(lq, lk, dh, 1.0, pv, vv, 0.0, &mut out, b * lq * d + h * dh, d);
            }
        }
        let t = Tensor { shape: vec![batch * lq, d], data: out };
        let rec = AttnRecord { q, k, v, batch, heads, lq, lk, scale, probs };
        Ok(self.push(t, Op::Attention(Box::new(rec)), &[q, k, v]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let (ar, ac) = self.dims(a);
                let k = if ta { ar } else { ac };
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |g| {
                    if ta {
                        gemm(k, n, m, bd, tb, gy, true, g, 1.0);
                    } else {
                        gemm(m, n, k, gy, false, bd, !tb, g, 1.0);
                    }
                });
                acc(b, &mut |g| {
                    if tb {
                        gemm(n, m, k, gy, true, ad, ta, g, 1.0);
                    } else {
                        gemm(k, m, n, ad, !ta, gy, false, g, 1.0);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, gy));
                acc(b, &mut |g| add_into(g, gy));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |g| add_into(g, gy));
                acc(b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x -= d));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |g| g.iter_mut().enumerate().for_each(|(j, x)| *x += gy[j] * bd[j]));
                acc(b, &mut |g| g.iter_mut().enumerate().for_each(|(j, x)| *x += gy[j] * ad[j]));
            }
            &Op::Scale(a, s) => acc(a, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += s * d)),
            &Op::AddScalar(a) => acc(a, &mut |g| add_into(g, gy)),
            &Op::AddRow(a, row) => {
                acc(a, &mut |g| add_into(g, gy));
                acc(row, &mut |g| {
                    let c = g.len();
                    for chunk in gy.chunks(c) {
                        add_into(g, chunk);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let (ad, rd) = (self.value(a).data(), self.value(row).data());
                let c = rd.len();
                acc(a, &mut |g| g.iter_mut().enumerate().for_each(|(j, x)| *x += gy[j] * rd[j % c]));
                acc(row, &mut |g| {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % c] += d * ad[j];
                    }
                });
            }
            &Op::RepeatRows(a, times) => acc(a, &mut |g| {
                let c = self.dims(a).1;
                for (r, chunk) in gy.chunks(c * times).enumerate() {
                    for rep in chunk.chunks(c) {
                        add_into(&mut g[r * c..(r + 1) * c], rep);
                    }
                }
            }),
            Op::LayerNorm { a, inv_std } => acc(*a, &mut |g| {
                let c = node.value.cols();
                for (r, s) in inv_std.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g[r * c + j] += s * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }),
            Op::Gelu { a, dydx } | Op::Silu { a, dydx } => {
                acc(*a, &mut |g| g.iter_mut().zip(gy.iter().zip(dydx)).for_each(|(x, (d, s))| *x += d * s));
            }
            &Op::Softmax(a) => acc(a, &mut |g| {
                let c = node.value.cols();
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        g[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::Embedding { table, ids } => acc(*table, &mut |g| {
                let d = node.value.cols();
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                }
            }),
            Op::CrossEntropy { logits, targets, probs } => acc(*logits, &mut |g| {
                let c = self.dims(*logits).1;
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        g[r * c + j] += gy[0] * (probs[r * c + j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |g| add_into(g, &gy[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    acc(p, &mut |g| {
                        for (r, gr) in g.chunks_mut(c.max(1)).enumerate() {
                            add_into(gr, &gy[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceRows { a, start } => acc(a, &mut |g| {
                let c = node.value.cols();
                add_into(&mut g[start * c..start * c + gy.len()], gy);
            }),
            &Op::SliceCols { a, start } => acc(a, &mut |g| {
                let (len, c) = (node.value.cols(), self.dims(a).1);
                for (r, gr) in gy.chunks(len.max(1)).enumerate() {
                    add_into(&mut g[r * c + start..r * c + start + len], gr);
                }
            }),
            Op::GatherRows { a, idx } => acc(*a, &mut |g| {
                let c = node.value.cols();
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut g[i * c..(i + 1) * c], &gy[r * c..(r + 1) * c]);
                }
            }),
            Op::L2Normalize { a, norms } => acc(*a, &mut |g| {
                let c = node.value.cols();
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        g[r * c + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }),
            &Op::Sum(a) => acc(a, &mut |g| g.iter_mut().for_each(|x| *x += gy[0])),
            &Op::Mean(a) => acc(a, &mut |g| {
                let n = g.len() as f64;
                g.iter_mut().for_each(|x| *x += gy[0] / n);
            }),
            &Op::Mse(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let s = 2.0 * gy[0] / ad.len() as f64;
                acc(a, &mut |g| g.iter_mut().enumerate().for_each(|(j, x)| *x += s * (ad[j] - bd[j])));
                acc(b, &mut |g| g.iter_mut().enumerate().for_each(|(j, x)| *x -= s * (ad[j] - bd[j])));
            }
            Op::Attention(rec) => self.attention_backward(rec, gy, &mut acc),
        }
    }

    fn attention_backward(&self, rec: &AttnRecord, gy: &[f64], acc: &mut Accumulate) {
        let &AttnRecord { q, k, v, batch, heads, lq, lk, scale, .. } = rec;
        let d = self.dims(q).1;
        let dh = d / heads;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &rec.probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                let go = View { data: gy, offset: b * lq * d + h * dh, rs: d, cs: 1 };
                // dP = dO V^T
                let vt = View { data: vd, offset: b * lk * d + h * dh, rs: 1, cs: d };
                gemm_view(lq, dh, lk, 1.0, go, vt, 0.0, &mut dp, 0, lk);
                // dV += P^T dO
                let pt = View { data: p, offset: 0, rs: 1, cs: lk };
                gemm_view(lk, lq, dh, 1.0, pt, go, 1.0, &mut dv, b * lk * d + h * dh, d);
                // dS = P * (dP - rowsum(P * dP)) * scale
                for i in 0..lq {
                    let (pr, dr) = (&p[i * lk..(i + 1) * lk], &mut dp[i * lk..(i + 1) * lk]);
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                let ds = View { data: &dp, offset: 0, rs: lk, cs: 1 };
                let kv = View { data: kd, offset: b * lk * d + h * dh, rs: d, cs: 1 };
                gemm_view(lq, lk, dh, 1.0, ds, kv, 1.0, &mut dq, b * lq * d + h * dh, d);
                let dst = View { data: &dp, offset: 0, rs: 1, cs: lk };
                let qv = View { data: qd, offset: b * lq * d + h * dh, rs: d, cs: 1 };
                gemm_view(lk, lq, dh, 1.0, dst, qv, 1.0, &mut dk, b * lk * d + h * dh, d);
            }
        }
        acc(q, &mut |g| add_into(g, &dq));
        acc(k, &mut |g| add_into(g, &dk));
        acc(v, &mut |g| add_into(g, &dv));
    }
}

/// tanh through one exp; libm tanh is several times slower.
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// In-place softmax; a row of all `-inf` becomes all zeros.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
