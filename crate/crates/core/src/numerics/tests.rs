use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference oracle: builds the loss from fresh leaves for each
/// perturbation and compares against the tape gradient of every input.
fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vs);
        g.value(l).item().unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = Tensor::randn(g.shape(x), 1.0, &mut rng(seed));
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

#[test]
fn matmul_identity() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    let mut g = Graph::new();
    let (x, i) = (g.constant(a.clone()), g.constant(Tensor::eye(2)));
    let y = g.matmul(x, i).unwrap();
    assert_eq!(g.value(y), &a);
    assert!(matches!(a.matmul(&Tensor::eye(3)), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn softmax_and_layer_norm_forward() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[5, 7], 3.0, &mut rng(1)));
    let s = g.softmax_rows(x);
    for r in 0..5 {
        assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let n = g.layer_norm(x);
    for r in 0..5 {
        let row = g.value(n).row(r);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn scalar_backward_cases() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let p = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let grads = g.backward(c).unwrap();
    assert!(grads.get(p).is_none_or(|d| d == [0.0]));

    let mut g = Graph::new();
    let m = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(m), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn gradcheck_elementwise_and_rows() {
    let mut r = rng(2);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    let row = Tensor::randn(&[4], 1.0, &mut r);
    let err = gradcheck(&[a.clone(), b.clone(), row], |g, v| {
        let s = g.sub(v[0], v[1]).unwrap();
        let m = g.mul(s, v[0]).unwrap();
        let m = g.add_row(m, v[2]).unwrap();
        let m = g.mul_row(m, v[2]).unwrap();
        let m = g.add(m, v[1]).unwrap();
        let m = g.scale(m, 0.7);
        let m = g.add_scalar(m, 0.3);
        weighted_sum(g, m, 9)
    });
    assert!(err < 1e-6, "{err}");
    let err = gradcheck(&[a, b], |g, v| {
        let r = g.repeat_rows(v[0], 3);
        let s = g.slice_rows(r, 2, 6).unwrap();
        let c = g.slice_cols(s, 1, 2).unwrap();
        let cat = g.concat_cols(&[c, c]).unwrap();
        let rows = g.concat_rows(&[cat, cat]).unwrap();
        let gathered = g.gather_rows(rows, &[0, 3, 3, 11]).unwrap();
        let m = g.mse(v[1], v[0]).unwrap();
        let w = weighted_sum(g, gathered, 4);
        let t = g.add(w, m).unwrap();
        let mean = g.mean(v[1]);
        g.add(t, mean).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_nonlinear_ops() {
    let mut r = rng(3);
    let x = Tensor::randn(&[4, 6], 1.5, &mut r);
    for which in 0..5 {
        let err = gradcheck(std::slice::from_ref(&x), |g, v| {
            let y = match which {
                0 => g.gelu(v[0]),
                1 => g.silu(v[0]),
                2 => g.softmax_rows(v[0]),
                3 => g.layer_norm(v[0]),
                _ => g.l2_normalize_rows(v[0]).unwrap(),
            };
            weighted_sum(g, y, 5)
        });
        assert!(err < 1e-6, "op {which}: {err}");
    }
}

#[test]
fn gradcheck_matmul_variants() {
    let mut r = rng(4);
    let a = Tensor::randn(&[3, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 2], 1.0, &mut r);
    let at = Tensor::randn(&[5, 3], 1.0, &mut r);
    let bt = Tensor::randn(&[2, 5], 1.0, &mut r);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let x = if ta { at.clone() } else { a.clone() };
        let y = if tb { bt.clone() } else { b.clone() };
        let err = gradcheck(&[x, y], |g, v| {
            let m = g.matmul_t(v[0], ta, v[1], tb).unwrap();
            weighted_sum(g, m, 6)
        });
        assert!(err < 1e-6, "{ta} {tb}: {err}");
    }
}

#[test]
fn gradcheck_embedding_and_cross_entropy() {
    let mut r = rng(5);
    let table = Tensor::randn(&[6, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 6], 1.0, &mut r);
    let err = gradcheck(&[table, w], |g, v| {
        let e = g.embedding(v[0], &[1, 3, 3, 0, 5]).unwrap();
        let logits = g.matmul(e, v[1]).unwrap();
        g.cross_entropy(logits, &[Some(2), None, Some(0), Some(5), Some(2)]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_known_values() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[3, 5]));
    let l = g.cross_entropy(uniform, &[Some(0), Some(4), None]).unwrap();
    assert!((g.value(l).item().unwrap() - 2.0 * 5f64.ln()).abs() < 1e-12);
    let sure = g.constant(Tensor::from_rows(&[vec![0.0, 800.0]]).unwrap());
    let l = g.cross_entropy(sure, &[Some(1)]).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
}

#[test]
fn gradcheck_attention() {
    let mut r = rng(6);
    let (batch, lq, lk, d) = (2, 3, 4, 6);
    let q = Tensor::randn(&[batch * lq, d], 1.0, &mut r);
    let k = Tensor::randn(&[batch * lk, d], 1.0, &mut r);
    let v = Tensor::randn(&[batch * lk, d], 1.0, &mut r);
    let mask = [true, true, false, true, true, false, false, false];
    let err = gradcheck(&[q, k, v], |g, vs| {
        let shape = AttnShape { batch, heads: 2, lq, lk, causal: false, key_mask: Some(&mask) };
        let o = g.attention(vs[0], vs[1], vs[2], shape).unwrap();
        weighted_sum(g, o, 7)
    });
    assert!(err < 1e-6, "{err}");
    let x = Tensor::randn(&[batch * 4, d], 1.0, &mut r);
    let err = gradcheck(&[x], |g, vs| {
        let shape = AttnShape { batch, heads: 3, lq: 4, lk: 4, causal: true, key_mask: None };
        let o = g.attention(vs[0], vs[0], vs[0], shape).unwrap();
        weighted_sum(g, o, 8)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_masks() {
    let mut g = Graph::new();
    let mut r = rng(7);
    let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut r));
    let v = g.constant(Tensor::randn(&[3, 4], 1.0, &mut r));
    let causal = AttnShape { batch: 1, heads: 1, lq: 3, lk: 3, causal: true, key_mask: None };
    let o = g.attention(x, x, v, causal).unwrap();
    // the first query sees only the first key
    assert_eq!(g.value(o).row(0), g.value(v).row(0));
    let none = [false; 3];
    let masked = AttnShape { causal: false, key_mask: Some(&none), ..causal };
    let o = g.attention(x, x, v, masked).unwrap();
    assert!(g.value(o).data().iter().all(|&y| y == 0.0));
}

#[test]
fn two_layer_network_gradcheck() {
    let mut r = rng(8);
    let x = Tensor::randn(&[5, 4], 1.0, &mut r);
    let w1 = Tensor::randn(&[4, 8], 0.5, &mut r);
    let b1 = Tensor::randn(&[8], 0.1, &mut r);
    let w2 = Tensor::randn(&[8, 3], 0.5, &mut r);
    let err = gradcheck(&[x, w1, b1, w2], |g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.add_row(h, v[2]).unwrap();
        let h = g.gelu(h);
        let y = g.matmul(h, v[3]).unwrap();
        g.cross_entropy(y, &[Some(0), Some(1), Some(2), Some(1), None]).unwrap()
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn degenerate_normalization() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(g.l2_normalize_rows(z), Err(NumericsError::DegenerateFeature(0)));
}

#[test]
fn adamw_cases() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::full(&[3], 2.0));
    let mut opt = AdamW::new(&store, 0.0);
    opt.step(&mut store, &[Some(vec![0.0; 3])], 0.1).unwrap();
    assert_eq!(store.get(id).data(), &[2.0; 3]);

    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::full(&[1], 1.0));
    let mut opt = AdamW::new(&store, 0.0);
    opt.step(&mut store, &[Some(vec![1.0])], 0.1).unwrap();
    // bias-corrected m/sqrt(v) = 1 / (1 + 1e-8)
    let expected = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.get(id).data()[0] - expected).abs() < 1e-15);

    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::full(&[2], 4.0));
    let mut opt = AdamW::new(&store, 0.5);
    opt.step(&mut store, &[Some(vec![0.0; 2])], 0.1).unwrap();
    assert_eq!(store.get(id).data(), &[4.0 * (1.0 - 0.1 * 0.5); 2]);

    assert!(opt.step(&mut store, &[Some(vec![0.0; 3])], 0.1).is_err());
}

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 100, 1e-3, 1e-4), 1e-3);
    assert!((cosine_lr(100, 100, 1e-3, 1e-4) - 1e-4).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 1e-3, 1e-4) - 5.5e-4).abs() < 1e-15);
}

#[test]
fn clipping_bounds_norm() {
    let mut grads = vec![Some(vec![3.0, 0.0]), None, Some(vec![4.0])];
    assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
    assert!((clip_grad_norm(&mut grads, 1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let mut r = rng(10);
        let x = g.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
        let w = g.constant(Tensor::randn(&[8, 8], 1.0, &mut r));
        let y = g.matmul(x, w).unwrap();
        let y = g.layer_norm(y);
        g.value(y).clone()
    };
    assert_eq!(build(), build());
}

proptest! {
    #[test]
    fn matmul_gradcheck_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let err = gradcheck(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.softmax_rows(y);
            weighted_sum(g, y, seed)
        });
        prop_assert!(err <= 1e-4);
    }
}
